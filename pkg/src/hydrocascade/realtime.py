"""Real-time layer: POD reduced model, linearisation along a nominal plan,
and one warm-started box QP per sampling instant.

States are the stacked cell (A, Q) vectors of the coarse cascade. The
reduced model works with deviations from a nominal trajectory:

    dr[t+1] = A_t dr[t] + B_t du[t] + f_t,   x ~ xbar_t + U dr

where U holds the POD modes and du stacks gate-opening and switch
deviations per dam.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .hydro.core import ContractError, ReachState
from .plsi import step_semi_implicit

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# state vectors


class StateVector:
    """Stack and unstack cascade states as (A_1, .., A_R, Q_1, .., Q_R)."""

    def __init__(self, topology):
        self.sizes = [r.bathymetry.n_cells for r in topology.reaches]
        self.n = 2 * sum(self.sizes)

    def pack(self, states):
        return np.concatenate([s.A for s in states] + [s.Q for s in states])

    def unpack(self, x, t=0.0):
        x = np.asarray(x, float)
        half = self.n // 2
        out, i = [], 0
        for m in self.sizes:
            A = np.maximum(x[i : i + m], 0.0)
            Q = np.where(A > 0, x[half + i : half + i + m], 0.0)
            out.append(ReachState(A.copy(), Q.copy(), t))
            i += m
        return out


class SemiImplicitMap:
    """x, (v, z) per dam -> x after one semi-implicit step of ``dt``."""

    def __init__(self, topology, dt, substeps=4, inflow=0.0):
        self.topology = topology
        self.dt = float(dt)
        self.substeps = substeps
        self.inflow = inflow
        self.sv = StateVector(topology)
        self.n_dams = topology.n_dams

    def inflow_at(self, t_index):
        q = self.inflow
        return float(q(t_index)) if callable(q) else float(q)

    def __call__(self, x, u, t_index=0):
        u = np.asarray(u, float)
        D = self.n_dams
        # no clipping: a probe past a gate bound raises and the caller
        # falls back to a one-sided difference
        controls = [(float(u[d]), float(u[D + d])) for d in range(D)]
        states = step_semi_implicit(self.sv.unpack(x), self.topology, controls,
                                    self.inflow_at(t_index), self.dt, substeps=self.substeps)
        return self.sv.pack(states)


def nominal_trajectory(step_map, x0, controls):
    """Iterate ``step_map`` from x0 under the control sequence."""
    xs = [np.asarray(x0, float).copy()]
    for t, u in enumerate(controls):
        xs.append(step_map(xs[-1], u, t))
    return xs


# ----------------------------------------------------------------------------
# POD


@dataclass
class PODBasis:
    modes: np.ndarray
    singular_values: np.ndarray
    energy: float

    @property
    def r(self):
        return self.modes.shape[1]

    def project(self, x):
        return self.modes.T @ np.asarray(x, float)

    def lift(self, r):
        return self.modes @ np.asarray(r, float)


def pod_basis(snapshots, energy_target=0.9999):
    """Smallest basis whose squared singular values reach ``energy_target``.

    ``snapshots`` has one snapshot per column. r is capped at the numerical
    rank; the snapshot reconstruction error is then at most
    sqrt(1 - energy_target) times the Frobenius norm of the snapshots.
    """
    S = np.asarray(snapshots, float)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ContractError("need at least 2 snapshots (columns)")
    if not 0.5 < energy_target <= 1.0:
        raise ContractError("energy target must lie in (0.5, 1]")
    U, s, _ = np.linalg.svd(S, full_matrices=False)
    total = float(np.sum(s**2))
    if total == 0.0:
        raise ContractError("all snapshots are zero")
    rank = int(np.sum(s > s[0] * max(S.shape) * np.finfo(float).eps))
    cum = np.cumsum(s**2) / total
    r = int(np.searchsorted(cum, energy_target * (1.0 - 1e-14), side="left")) + 1
    r = max(1, min(r, rank))
    return PODBasis(U[:, :r].copy(), s.copy(), float(cum[r - 1]))


# ----------------------------------------------------------------------------
# linearisation


@dataclass
class LinearizedDynamics:
    A: list
    B: list
    f: list
    xbar: list
    ubar: list
    basis: PODBasis
    vmax: np.ndarray = None
    one_sided: list = field(default_factory=list)

    @property
    def r(self):
        return self.basis.r

    @property
    def steps(self):
        return len(self.A)

    def predict(self, dr0, du):
        """Deviation trajectory dr[0..T] of the linear model."""
        out = [np.asarray(dr0, float)]
        for t, d in enumerate(du):
            out.append(self.A[t] @ out[-1] + self.B[t] @ np.asarray(d, float) + self.f[t])
        return out


def linearize_along(xbar, ubar, basis, step_map, vmax=None, h_state=1e-4, h_control=1e-5):
    """Central differences of the reduced deviation map at each nominal step.

    f_t = U'(step(xbar_t, ubar_t) - xbar_{t+1}), so zero deviations are
    predicted exactly. A probe whose step fails switches that column to a
    one-sided difference and is logged.
    """
    U = basis.modes
    A_l, B_l, f_l, one_sided = [], [], [], []
    for t, u in enumerate(ubar):
        u = np.asarray(u, float)
        x, x_next = xbar[t], xbar[t + 1]
        F = lambda dr, du: U.T @ (step_map(x + U @ dr, u + du, t) - x_next)
        zr, zu = np.zeros(basis.r), np.zeros(u.size)
        f0 = F(zr, zu)
        A = np.empty((basis.r, basis.r))
        B = np.empty((basis.r, u.size))
        for j in range(basis.r + u.size):
            is_state = j < basis.r
            h = h_state if is_state else h_control
            e = np.zeros(basis.r + u.size)
            e[j] = h
            try:
                fp = F(e[: basis.r], e[basis.r :])
                fm = F(-e[: basis.r], -e[basis.r :])
                col = (fp - fm) / (2 * h)
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.info("step %d column %d: one-sided difference (%s)", t, j, exc)
                one_sided.append((t, j))
                try:
                    col = (F(e[: basis.r], e[basis.r :]) - f0) / h
                except (ArithmeticError, ValueError, RuntimeError):
                    col = (f0 - F(-e[: basis.r], -e[basis.r :])) / h
            if is_state:
                A[:, j] = col
            else:
                B[:, j - basis.r] = col
        A_l.append(A)
        B_l.append(B)
        f_l.append(f0)
    if vmax is None:
        vmax = np.full(ubar[0].size // 2 if len(ubar) else 0, np.inf)
    return LinearizedDynamics(A_l, B_l, f_l, [np.asarray(x, float) for x in xbar],
                              [np.asarray(u, float) for u in ubar], basis,
                              np.asarray(vmax, float), one_sided)


# ----------------------------------------------------------------------------
# box QP


@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    active: np.ndarray
    kkt: float
    value: float


def box_qp(H, g, lo, hi, x0=None, active=None, max_iter=200, tol=1e-12):
    """Primal active-set method for min x'Hx/2 + g'x on lo <= x <= hi.

    ``x0`` must be feasible (it is clipped); ``active`` marks bounds to
    start in the working set. Counts one iteration per subproblem solve.
    """
    n = g.size
    x = np.zeros(n) if x0 is None else np.clip(np.asarray(x0, float), lo, hi)
    # working set: -1 lower, +1 upper, 0 free
    W = np.zeros(n, dtype=int)
    if active is not None:
        act = np.asarray(active, dtype=int)
        W[(act < 0) & (x <= lo)] = -1
        W[(act > 0) & (x >= hi)] = 1
    it = 0
    for it in range(1, max_iter + 1):
        F = W == 0
        xf = x.copy()
        if np.any(F):
            rhs = -(g[F] + H[np.ix_(F, ~F)] @ x[~F])
            xf[F] = np.linalg.solve(H[np.ix_(F, F)], rhs)
        p = xf - x
        if np.abs(p).max(initial=0.0) <= tol * (1.0 + np.abs(x).max(initial=0.0)):
            grad = H @ x + g
            # a bound in the working set is right if its multiplier pushes outward
            bad = np.where(W == -1, -grad, np.where(W == 1, grad, 0.0))
            j = int(np.argmax(bad))
            if bad[j] <= tol * (1.0 + np.abs(grad).max(initial=0.0)):
                break
            W[j] = 0
            continue
        alpha, block = 1.0, -1
        for i in np.flatnonzero(F):
            if p[i] < 0 and x[i] + p[i] < lo[i]:
                a = (lo[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
            elif p[i] > 0 and x[i] + p[i] > hi[i]:
                a = (hi[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
        x = x + alpha * p
        if block >= 0:
            W[block] = -1 if p[block] < 0 else 1
            x[block] = lo[block] if p[block] < 0 else hi[block]
    grad = H @ x + g
    kkt = float(np.abs(x - np.clip(x - grad, lo, hi)).max(initial=0.0))
    active_out = np.where(x <= lo, -1, np.where(x >= hi, 1, 0))
    return QPResult(x, it, active_out, kkt, float(0.5 * x @ H @ x + g @ x))


# ----------------------------------------------------------------------------
# real-time iteration


@dataclass
class RTIWeights:
    """Tracking weights and the linear economic reward per control entry."""

    W: np.ndarray = None
    R: float = 1e-2
    q_v: np.ndarray = None
    q_z: np.ndarray = None
    budget: float = 0.05


@dataclass
class RTIState:
    warm: np.ndarray
    active: np.ndarray
    last_reduced: np.ndarray = None
    step: int = 0

    @classmethod
    def cold(cls, horizon, n_dams):
        return cls(np.zeros(horizon * n_dams), np.zeros(horizon * n_dams, dtype=int))


@dataclass
class RTIInfo:
    control: list
    dv: np.ndarray
    iterations: int
    cold_iterations: int
    kkt: float
    solve_time: float
    fallback: bool
    over_budget: bool
    value: float


def _condense(lin, t0, H, dr0, n_dams, dz=None):
    """dr_t = Phi_t dr0 + sum Gamma dv + psi_t for t = 1..H over the v columns."""
    r = lin.r
    Phi = np.eye(r)
    psi = np.zeros(r)
    rows_G, rows_c = [], []
    G_prev = np.zeros((r, H * n_dams))
    for j in range(H):
        t = min(t0 + j, lin.steps - 1)
        A, B = lin.A[t], lin.B[t]
        Bv, Bz = B[:, :n_dams], B[:, n_dams:]
        c = lin.f[t] + (Bz @ dz[j] if dz is not None else 0.0)
        G = A @ G_prev
        G[:, j * n_dams : (j + 1) * n_dams] += Bv
        Phi = A @ Phi
        psi = A @ psi + c
        rows_G.append(G)
        rows_c.append(Phi @ dr0 + psi)
        G_prev = G
    Gam = np.vstack(rows_G)
    c = np.concatenate(rows_c)
    return Gam, c


def _qp_data(lin, t0, H, dr0, weights, dz=None):
    D = lin.ubar[0].size // 2
    Gam, c = _condense(lin, t0, H, dr0, D, dz)
    r = lin.r
    W = np.eye(r) if weights.W is None else np.asarray(weights.W, float)
    Wb = np.kron(np.eye(H), W)
    Hq = 2.0 * (Gam.T @ Wb @ Gam + weights.R * np.eye(H * D))
    qv = np.zeros(H * D) if weights.q_v is None else np.resize(np.asarray(weights.q_v, float), H * D)
    g = 2.0 * Gam.T @ Wb @ c - qv
    const = float(c @ Wb @ c)
    vbar = np.concatenate([lin.ubar[min(t0 + j, lin.steps - 1)][:D] for j in range(H)])
    return Hq, g, const, vbar, D


def _bounds(lin, vbar, D, H):
    vm = np.tile(np.resize(np.asarray(lin.vmax, float), D), H)
    return -vbar, vm - vbar


def rti_step(x_meas, lin, rti_state, weights, horizon, z_override=None, compare_cold=False):
    """One QP real-time iteration at nominal step ``rti_state.step``.

    The measurement replaces the initial reduced state; the QP tracks the
    nominal plan with weights W (states) and R (gate deviations) minus the
    economic reward, subject to 0 <= v <= v_max. The first control is
    returned; the shifted solution warm-starts the next call.
    """
    t0 = rti_state.step
    H = max(1, min(horizon, lin.steps - t0))
    dr0 = lin.basis.project(np.asarray(x_meas, float) - lin.xbar[min(t0, len(lin.xbar) - 1)])
    D = lin.ubar[0].size // 2
    zbar = np.array([lin.ubar[min(t0 + j, lin.steps - 1)][D:] for j in range(H)])
    z_use = zbar if z_override is None else np.broadcast_to(np.asarray(z_override, float), zbar.shape)
    dz = z_use - zbar
    tic = time.perf_counter()
    fallback = False
    try:
        Hq, g, const, vbar, D = _qp_data(lin, t0, H, dr0, weights, dz)
        lo, hi = _bounds(lin, vbar, D, H)
        if np.any(lo > hi) or not (np.all(np.isfinite(Hq)) and np.all(np.isfinite(g))):
            raise ArithmeticError("QP data infeasible or non-finite")
        warm = np.resize(rti_state.warm, H * D) if rti_state.warm.size else np.zeros(H * D)
        act = np.resize(rti_state.active, H * D) if rti_state.active.size else None
        res = box_qp(Hq, g, lo, hi, warm, act)
        dv, iters, kkt, value = res.x, res.iterations, res.kkt, res.value + const
        active = res.active
        if weights.q_z is not None:
            value -= float(np.resize(np.asarray(weights.q_z, float), dz.size) @ dz.ravel())
    except (ArithmeticError, np.linalg.LinAlgError, ContractError) as exc:
        log.warning("RTI fallback: %s", exc)
        fallback = True
        vbar = np.concatenate([lin.ubar[min(t0 + j, lin.steps - 1)][:D] for j in range(H)])
        dv, iters, kkt, value = np.zeros(H * D), 0, math.nan, math.inf
        active = np.zeros(H * D, dtype=int)
    solve_time = time.perf_counter() - tic
    cold_iters = -1
    if compare_cold and not fallback:
        cold_iters = box_qp(Hq, g, lo, hi).iterations
    vmax = np.resize(np.asarray(lin.vmax, float), D)
    v0 = np.clip(vbar[:D] + dv[:D], 0.0, vmax)
    control = [(float(v0[d]), float(z_use[0, d])) for d in range(D)]
    # shift: drop the applied step, repeat the last
    shifted = np.concatenate((dv[D:], dv[-D:])) if H > 1 else dv.copy()
    shifted_act = np.concatenate((active[D:], active[-D:])) if H > 1 else active.copy()
    new_state = RTIState(shifted, shifted_act, dr0, t0 + 1)
    info = RTIInfo(control, dv, iters, cold_iters, kkt, solve_time, fallback,
                   solve_time > weights.budget, value)
    return control, new_state, info


def miqp_switch_step(x_meas, lin, candidates, rti_state, weights, horizon):
    """Enumerate on/off for the dams in ``candidates`` over the RT horizon.

    Each subset S of the candidates opens the dams in S and closes the
    rest; every assignment is scored by its QP optimum (minus the switch
    reward q_z' dz) and the lowest wins, ties going to the earlier subset
    in lexicographic order. Returns (z per dam, value) and keeps the plan
    when the set is empty or every assignment fails.
    """
    t0 = rti_state.step
    D = lin.ubar[0].size // 2
    z_plan = lin.ubar[min(t0, lin.steps - 1)][D:].copy()
    cand = sorted(set(int(c) for c in candidates))
    if len(cand) > 10:
        raise ContractError("at most 10 candidate dams")
    if not cand:
        return z_plan, math.nan
    subsets = sorted(itertools.chain.from_iterable(itertools.combinations(cand, k) for k in range(len(cand) + 1)))
    best_z, best_val = z_plan, math.inf
    for S in subsets:
        z = z_plan.copy()
        for d in cand:
            z[d] = 1.0 if d in S else 0.0
        probe = RTIState(rti_state.warm.copy(), rti_state.active.copy(), rti_state.last_reduced, t0)
        _, _, info = rti_step(x_meas, lin, probe, weights, horizon, z_override=z)
        if info.fallback or not math.isfinite(info.value):
            continue
        if info.value < best_val:
            best_val, best_z = info.value, z
    return best_z, best_val


def switch_candidates(lin, t0, horizon):
    """Dams whose planned z changes within the RT horizon."""
    D = lin.ubar[0].size // 2
    zs = np.array([lin.ubar[min(t0 + j, lin.steps - 1)][D:] for j in range(max(horizon, 1))])
    return [d for d in range(D) if np.any(zs[:, d] != zs[0, d])]


# ----------------------------------------------------------------------------
# segment loop


@dataclass
class RTConfig:
    horizon: int = 5
    K_z: int = 5
    epsilon: float = 1.0
    compare_cold: bool = False


@dataclass
class SegmentLog:
    step: int
    solve_time: float
    iterations: int
    cold_iterations: int
    tracking_error: float
    fallback: bool
    discrepancy: float
    over_budget: bool
    kkt: float


@dataclass
class SegmentResult:
    controls: list
    measurements: list
    logs: list
    retraining: list
    rti_state: RTIState

    def latency(self):
        t = np.array([r.solve_time for r in self.logs])
        return {"p50": float(np.percentile(t, 50)), "p95": float(np.percentile(t, 95)),
                "max": float(t.max())} if t.size else {}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "solve_time", "qp_iterations", "cold_iterations", "tracking_error",
                        "fallback", "discrepancy", "over_budget", "kkt"])
            for r in self.logs:
                w.writerow([r.step, repr(r.solve_time), r.iterations, r.cold_iterations,
                            repr(r.tracking_error), int(r.fallback), repr(r.discrepancy),
                            int(r.over_budget), repr(r.kkt)])


def run_realtime_segment(plant, lin, steps, weights, cfg=None, rti_state=None):
    """Measure, assimilate, solve, apply for ``steps`` sampling instants.

    ``plant.measure()`` returns the coarse state vector and
    ``plant.apply(controls)`` advances the plant by one RT interval. The
    discrepancy is the distance between the measured state and the
    reduced model's one-step prediction; steps where it exceeds
    ``cfg.epsilon`` are registered for retraining.
    """
    cfg = cfg or RTConfig()
    D = lin.ubar[0].size // 2
    st = rti_state or RTIState.cold(cfg.horizon, D)
    controls, meas, logs, retrain = [], [], [], []
    predicted = None
    for k in range(steps):
        x = np.asarray(plant.measure(), float)
        meas.append(x)
        t = st.step
        xbar = lin.xbar[min(t, len(lin.xbar) - 1)]
        disc = math.nan
        if predicted is not None:
            disc = float(np.linalg.norm(x - predicted))
            if disc > cfg.epsilon:
                retrain.append((t, x.copy(), predicted.copy()))
        z_over = None
        if cfg.K_z and k % cfg.K_z == 0:
            cand = switch_candidates(lin, t, cfg.horizon)
            if cand:
                z_over, _ = miqp_switch_step(x, lin, cand, st, weights, cfg.horizon)
        control, st_new, info = rti_step(x, lin, st, weights, cfg.horizon, z_over, cfg.compare_cold)
        # one-step prediction of the next measurement
        if t < lin.steps:
            du = np.concatenate(([c[0] for c in control], [c[1] for c in control])) - lin.ubar[t]
            dr0 = lin.basis.project(x - xbar)
            dr1 = lin.A[t] @ dr0 + lin.B[t] @ du + lin.f[t]
            predicted = lin.xbar[t + 1] + lin.basis.lift(dr1)
        else:
            predicted = None
        plant.apply(control)
        controls.append(control)
        logs.append(SegmentLog(t, info.solve_time, info.iterations, info.cold_iterations,
                               float(np.linalg.norm(x - xbar)), info.fallback, disc,
                               info.over_budget, info.kkt))
        st = st_new
    return SegmentResult(controls, meas, logs, retrain, st)
