"""Finite-dimensional optimal control of the cascade.

Controls are piecewise constant on an interval grid. A schedule is scored
by simulating every scenario of a fan, summing turbine revenue and
operating costs, and adding a log barrier on the smallest state-bound
margin at each interval end. Gradients come from differencing the whole
simulate-and-score pipeline with common random numbers.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .hydro.core import (
    ContractError,
    DefectError,
    DryCellError,
    advance_cascade_detailed,
    cascade_cfl_dt,
    power_output,
)
from .plsi import NonconvergenceError, step_semi_implicit_detailed

log = logging.getLogger(__name__)

INF = math.inf


@dataclass
class ControlSchedule:
    """``v`` and ``z`` have shape (n_dams, N_T); ``grid`` has N_T + 1 times."""

    grid: np.ndarray
    v: np.ndarray
    z: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0):
            raise ContractError("grid must be strictly increasing with at least 2 points")
        if self.v.shape != self.z.shape or self.v.shape[1] != self.grid.size - 1:
            raise ContractError("v and z must have shape (n_dams, len(grid) - 1)")

    @property
    def n_intervals(self):
        return self.grid.size - 1

    @property
    def n_dams(self):
        return self.v.shape[0]

    def validate(self, dams):
        if len(dams) != self.n_dams:
            raise ContractError("schedule dam count does not match topology")
        for d, dam in enumerate(dams):
            if np.any(self.v[d] < 0) or np.any(self.v[d] > dam.max_opening):
                raise ContractError(f"dam {d}: gate opening outside [0, v_max]")
        if np.any(self.z < 0) or np.any(self.z > 1):
            raise ContractError("z outside [0, 1]")
        if not self.relaxed and np.any((self.z != 0) & (self.z != 1)):
            raise ContractError("binary schedule has fractional z")

    def copy(self):
        return ControlSchedule(self.grid.copy(), self.v.copy(), self.z.copy(), self.relaxed)

    def controls_at(self, k):
        return [(float(self.v[d, k]), float(self.z[d, k])) for d in range(self.n_dams)]

    @classmethod
    def constant(cls, grid, n_dams, v, z=1.0):
        n = len(grid) - 1
        return cls(np.asarray(grid, float), np.full((n_dams, n), float(v)), np.full((n_dams, n), float(z)))


@dataclass
class ObjectiveParams:
    c_v: float = 0.0
    c_z: float = 0.0
    beta_B: float = 1e-3
    h_min: float = 0.1
    h_max: float = 10.0
    u_max: float = 3.0
    delta_S: float = 0.05
    price_scale: float = 1.0

    def __post_init__(self):
        if self.beta_B < 0:
            raise ContractError("barrier weight must be non-negative")
        if not self.h_min < self.h_max:
            raise ContractError("h_min must be below h_max")
        if self.c_v < 0 or self.c_z < 0:
            raise ContractError("operating cost weights must be non-negative")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class SolverChoice:
    """Forward model used by ``simulate_schedule``.

    ``kind`` is ``explicit`` (CFL-limited steps) or ``semi-implicit``
    (fixed ``dt`` and a fixed advection sub-step count, which keeps the
    map from controls to objective smooth enough to difference).
    """

    kind: str = "semi-implicit"
    dt: float = 60.0
    substeps: int | None = None

    def __post_init__(self):
        if self.kind not in ("explicit", "semi-implicit"):
            raise ContractError(f"unknown solver {self.kind!r}")


@dataclass
class ScenarioTrajectory:
    snapshots: list
    chi: int
    energy: np.ndarray
    revenue: np.ndarray
    gate_mismatch: np.ndarray
    failure: str = ""


@dataclass
class TrajectoryBundle:
    scenarios: list
    grid: np.ndarray
    widths: tuple = ()
    dxs: tuple = ()

    @property
    def chi(self):
        return np.array([s.chi for s in self.scenarios])

    def to_csv(self, path, topology):
        """Snapshot rows: scenario, k, t, reach, cell, x, z_b, A, Q."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "k", "t", "reach", "cell", "x", "z_b", "width", "A", "Q"])
            for s_i, sc in enumerate(self.scenarios):
                for k, snap in enumerate(sc.snapshots):
                    for r_i, (r, st) in enumerate(zip(topology.reaches, snap)):
                        b = r.bathymetry
                        for c in range(st.A.size):
                            w.writerow([s_i, k, repr(float(self.grid[k])), r_i, c,
                                        repr(float(b.cell_centers[c])), repr(float(b.bed_elevation[c])),
                                        repr(float(r.width)), repr(float(st.A[c])), repr(float(st.Q[c]))])


SIM_FAILURES = (NonconvergenceError, DefectError, DryCellError, FloatingPointError, ValueError)


def _as_paths(paths):
    if hasattr(paths, "scenarios"):
        return list(paths.scenarios)
    if isinstance(paths, (list, tuple)):
        return list(paths)
    return [paths]


def simulate_schedule(topology, schedule, paths, solver_choice, initial_states):
    """Forward-simulate each scenario with controls held per interval.

    chi = 0 marks a scenario whose solver failed or produced non-finite
    values; state-bound satisfaction is judged by ``objective_eval``.
    """
    if isinstance(solver_choice, str):
        solver_choice = SolverChoice(solver_choice)
    schedule.validate(topology.dams)
    scen = []
    for path in _as_paths(paths):
        scen.append(_simulate_one(topology, schedule, path, solver_choice, initial_states))
    return TrajectoryBundle(scen, schedule.grid.copy(),
                            tuple(r.width for r in topology.reaches),
                            tuple(r.bathymetry.dx for r in topology.reaches))


def _simulate_one(topology, schedule, path, sc, initial_states):
    nd, nt = schedule.n_dams, schedule.n_intervals
    energy = np.zeros((nd, nt))
    revenue = np.zeros(nt)
    mismatch = np.zeros(nd)
    states = [s.copy() for s in initial_states]
    for s in states:
        s.t = float(schedule.grid[0])
    snaps = [states]
    try:
        for k in range(nt):
            ctrl = schedule.controls_at(k)
            t, t_end = float(schedule.grid[k]), float(schedule.grid[k + 1])
            while t < t_end - 1e-9:
                q_in = path.value_at(t, "inflow")
                price = path.value_at(t, "price")
                if sc.kind == "explicit":
                    dt = min(cascade_cfl_dt(topology, states), t_end - t)
                    res = advance_cascade_detailed(topology, states, ctrl, q_in, dt)
                else:
                    dt = min(sc.dt, t_end - t)
                    res = step_semi_implicit_detailed(states, topology, ctrl, q_in, dt, substeps=sc.substeps)
                p = np.array([power_output(q, h, dam, topology.g)
                              for q, h, dam in zip(res.gate_flows, res.heads, topology.dams)])
                e = p * dt / 3600.0
                energy[:, k] += e
                revenue[k] += price * float(e.sum())
                mismatch += (res.requested_gate_flows - res.gate_flows) * dt
                states = res.states
                t += dt
            for s in states:
                s.t = t_end
            snaps.append(states)
            if not all(np.all(np.isfinite(s.A)) and np.all(np.isfinite(s.Q)) for s in states):
                raise FloatingPointError("non-finite state")
    except SIM_FAILURES as exc:
        return ScenarioTrajectory(snaps, 0, energy, revenue, mismatch, str(exc))
    return ScenarioTrajectory(snaps, 1, energy, revenue, mismatch)


# ----------------------------------------------------------------------------
# objective


def state_margins(snapshot, params, widths):
    """Cellwise margins to the depth and velocity bounds (all reaches stacked)."""
    out = []
    for st, W in zip(snapshot, widths):
        h = st.A / W
        wet = st.A > 0
        u = np.where(wet, st.Q / np.where(wet, st.A, 1.0), 0.0)
        lo = h - (params.h_min + params.delta_S)
        hi = (params.h_max - params.delta_S) - h
        vel = params.u_max - np.abs(u)
        out.append(np.minimum(np.minimum(lo, hi), vel))
    return np.concatenate(out)


def operating_cost(schedule, params, v_prev=None, z_prev=None):
    """c_v * total variation of v + c_z * total variation of z (switch count)."""
    v, z = schedule.v, schedule.z
    if v_prev is not None:
        v = np.column_stack((np.asarray(v_prev, float), v))
    if z_prev is not None:
        z = np.column_stack((np.asarray(z_prev, float), z))
    tv_v = float(np.abs(np.diff(v, axis=1)).sum())
    tv_z = float(np.abs(np.diff(z, axis=1)).sum())
    return params.c_v * tv_v + params.c_z * tv_z


@dataclass
class ObjectiveValue:
    J: float
    revenue: float = 0.0
    operating: float = 0.0
    barrier: float = 0.0
    violations: list = field(default_factory=list)
    min_margin: float = INF

    @property
    def finite(self):
        return math.isfinite(self.J)


def objective_eval(bundle, schedule, params, v_prev=None, z_prev=None):
    """J = mean_s sum_t [-price * energy] + C(v, z) - beta_B mean_s sum_t log(margin).

    Margins are taken at the interval ends t_1..t_NT. Returns +inf with a
    list of (scenario, k, cell) violations whenever a scenario failed or a
    margin is not strictly positive.
    """
    violations = []
    log_sum = 0.0
    rev = 0.0
    min_margin = INF
    for s_i, sc in enumerate(bundle.scenarios):
        if not sc.chi:
            violations.append((s_i, -1, -1))
            continue
        rev += float(sc.revenue.sum()) * params.price_scale
        for k in range(1, len(sc.snapshots)):
            m = state_margins(sc.snapshots[k], params, bundle.widths)
            low = float(m.min())
            min_margin = min(min_margin, low)
            if low <= 0.0:
                violations.extend((s_i, k, int(c)) for c in np.flatnonzero(m <= 0.0))
            else:
                log_sum += math.log(low)
    n = len(bundle.scenarios)
    op = operating_cost(schedule, params, v_prev, z_prev)
    if violations:
        return ObjectiveValue(INF, rev / n, op, INF, violations, min_margin)
    barrier = -params.beta_B * log_sum / n
    return ObjectiveValue(-rev / n + op + barrier, rev / n, op, barrier, [], min_margin)


# ----------------------------------------------------------------------------
# infeasibility


@dataclass
class Residuals:
    pde: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coupling: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(0))
    state_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))


def infeasibility_phi(res):
    """phi = |e| + |coupling| + |boundary| + |negative part of margins|, l2 norms."""
    neg = np.minimum(np.asarray(res.state_margins, dtype=float), 0.0)
    return float(
        np.linalg.norm(res.pde) + np.linalg.norm(res.coupling)
        + np.linalg.norm(res.boundary) + np.linalg.norm(neg)
    )


def bundle_residuals(bundle, params):
    """Residual blocks of a simulated bundle.

    The PDE and reach-coupling residuals vanish because the solver satisfies
    them by construction; the boundary block is the volume by which the gate
    limiter cut the requested discharge.
    """
    bnd, marg = [], []
    for sc in bundle.scenarios:
        bnd.append(sc.gate_mismatch)
        for snap in sc.snapshots[1:]:
            marg.append(state_margins(snap, params, bundle.widths))
    return Residuals(
        boundary=np.concatenate(bnd) if bnd else np.zeros(0),
        state_margins=np.concatenate(marg) if marg else np.zeros(0),
    )


# ----------------------------------------------------------------------------
# switch decomposition


@dataclass
class SwitchDecomposition:
    switch_counts: np.ndarray
    switch_times: list
    initial: np.ndarray

    def __post_init__(self):
        for times, n in zip(self.switch_times, self.switch_counts):
            if len(times) != n:
                raise ContractError("switch count does not match number of times")
            if np.any(np.diff(times) <= 0):
                raise ContractError("switch times must be strictly increasing")


def decompose_switches(z, grid):
    """Count switches of a binary schedule and place them on interval starts."""
    z = np.atleast_2d(np.asarray(z))
    if np.any((z != 0) & (z != 1)):
        raise ContractError("decompose_switches needs a binary schedule")
    grid = np.asarray(grid, dtype=float)
    times = []
    for row in z:
        idx = np.flatnonzero(np.diff(row) != 0) + 1
        times.append(grid[idx].copy())
    return SwitchDecomposition(np.array([len(t) for t in times]), times, z[:, 0].astype(int).copy())


def recompose(dec, grid, mode="sample"):
    """Rebuild z on ``grid``.

    ``sample`` reads the state at each interval start (exact inverse of
    ``decompose_switches``); ``average`` gives the fraction of each
    interval spent open, for switch times that fall inside intervals.
    """
    grid = np.asarray(grid, dtype=float)
    n = grid.size - 1
    out = np.empty((len(dec.initial), n))
    for d, (z0, times) in enumerate(zip(dec.initial, dec.switch_times)):
        times = np.asarray(times, dtype=float)
        if mode == "sample":
            flips = np.searchsorted(times, grid[:-1], side="right")
            out[d] = (int(z0) + flips) % 2
        elif mode == "average":
            for k in range(n):
                a, b = grid[k], grid[k + 1]
                cuts = np.concatenate(([a], times[(times > a) & (times < b)], [b]))
                state = (int(z0) + np.searchsorted(times, a, side="right")) % 2
                on = 0.0
                for lo, hi in zip(cuts[:-1], cuts[1:]):
                    on += (hi - lo) * state
                    state ^= 1
                out[d, k] = on / (b - a)
        else:
            raise ContractError(f"unknown recompose mode {mode!r}")
    return out


# ----------------------------------------------------------------------------
# problem wrapper and sensitivities


@dataclass
class OCPInstance:
    """Everything needed to score a schedule: model, scenarios, weights."""

    topology: object
    initial_states: list
    paths: object
    params: ObjectiveParams
    grid: np.ndarray
    solver: SolverChoice = field(default_factory=SolverChoice)
    v_prev: np.ndarray = None
    z_prev: np.ndarray = None

    def simulate(self, schedule):
        return simulate_schedule(self.topology, schedule, self.paths, self.solver, self.initial_states)

    def evaluate(self, schedule):
        bundle = self.simulate(schedule)
        return objective_eval(bundle, schedule, self.params, self.v_prev, self.z_prev), bundle

    def J(self, schedule):
        return self.evaluate(schedule)[0].J


@dataclass
class ScheduleCodec:
    """Maps the free entries of a schedule to a flat vector.

    Every v entry is free; z entries are free where ``z_free`` is True.
    """

    template: ControlSchedule
    z_free: np.ndarray

    @classmethod
    def for_schedule(cls, schedule, z_free=None):
        if z_free is None:
            z_free = np.zeros(schedule.z.shape, dtype=bool)
        return cls(schedule.copy(), np.asarray(z_free, dtype=bool))

    @property
    def n_v(self):
        return self.template.v.size

    @property
    def size(self):
        return self.n_v + int(self.z_free.sum())

    def pack(self, schedule):
        return np.concatenate((schedule.v.ravel(), schedule.z[self.z_free]))

    def unpack(self, x):
        s = self.template.copy()
        s.v = np.asarray(x[: self.n_v], dtype=float).reshape(s.v.shape).copy()
        s.z = s.z.copy()
        s.z[self.z_free] = x[self.n_v :]
        s.relaxed = s.relaxed or bool(self.z_free.any())
        return s

    def bounds(self, dams):
        vmax = np.repeat([d.max_opening for d in dams], self.template.n_intervals)
        lo = np.zeros(self.size)
        hi = np.concatenate((vmax, np.ones(int(self.z_free.sum()))))
        return lo, hi


@dataclass
class GradientReport:
    gradient: np.ndarray
    one_sided: list
    failed: list
    evaluations: int


def sensitivities(f, x, mode="central_fd", lower=None, upper=None, f0=None):
    """Finite-difference gradient of ``f`` with step 1e-5 (1 + |x_i|).

    ``f`` must reuse the same random numbers on every call. Probes that
    would leave [lower, upper] or return +inf switch that coordinate to a
    one-sided difference; if both sides fail the entry is NaN.
    """
    if mode not in ("forward_fd", "central_fd"):
        raise ContractError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=float)
    n = x.size
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
    evals = 0
    if f0 is None:
        f0 = f(x)
        evals += 1
    g = np.empty(n)
    one_sided, failed = [], []
    for i in range(n):
        h = 1e-5 * (1.0 + abs(x[i]))
        fp = fm = INF
        can_p = x[i] + h <= hi[i]
        can_m = x[i] - h >= lo[i]
        if can_p:
            xp = x.copy()
            xp[i] += h
            fp = f(xp)
            evals += 1
        if mode == "central_fd" or not (can_p and math.isfinite(fp)):
            if can_m:
                xm = x.copy()
                xm[i] -= h
                fm = f(xm)
                evals += 1
        if mode == "central_fd" and math.isfinite(fp) and math.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        elif math.isfinite(fp) and math.isfinite(f0):
            g[i] = (fp - f0) / h
            if mode == "central_fd":
                one_sided.append(i)
        elif math.isfinite(fm) and math.isfinite(f0):
            g[i] = (f0 - fm) / h
            one_sided.append(i)
        else:
            g[i] = np.nan
            failed.append(i)
    if one_sided:
        log.info("one-sided differences at %s", one_sided)
    return GradientReport(g, one_sided, failed, evals)


def schedule_objective(instance, codec):
    """x -> J for use with ``sensitivities`` and the SQCQP solver."""

    def f(x):
        return instance.J(codec.unpack(x))

    return f


def with_beta(params, beta):
    return replace(params, beta_B=beta)
