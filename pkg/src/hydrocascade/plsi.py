"""Semi-implicit staggered free-surface stepping with wet/dry active sets.

Levels eta live at cell centres, discharges q at cell faces (walls at both
reach ends carry q = 0). Gravity acts implicitly, advection is explicit
(momentum-conservative upwind, frozen at t^n and sub-cycled), friction is
linearised around |u^n|. Eliminating the face discharges leaves, per cell
and in depth units,

    V_i(eta) + sum_f T_f (eta_i - eta_j) = b_i,     V_i(eta) = max(0, eta - z_b,i)

a mildly nonlinear system with an M-matrix T. It is solved by the nested
Newton (active-set) iteration

    (P(sigma) + T) eta = b + P(sigma) z_b,    sigma = (eta > z_b)

started from a level whose residual is non-negative, which terminates in
finitely many steps. Mass is conserved exactly by construction and depths
are non-negative because the stored depth is V_i(eta).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .hydro import backend
from .hydro.core import (
    ContractError,
    DefectError,
    ReachState,
    StepResult,
    outlet_discharge,
    requested_gate_flows,
)

ADVECTIVE_COURANT = 0.5


class NonconvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def positivity_clip(eta, z_b):
    """H = max(0, z_b + eta) elementwise.

    Sign convention: z_b is the depth of the bed below datum, so a bed at
    elevation e has z_b = -e.
    """
    return np.maximum(0.0, np.asarray(z_b, dtype=float) + np.asarray(eta, dtype=float))


def face_depth(eta, zb):
    """Central face depth max(0, mean(eta) - max(z_b)) on the n-1 interior faces."""
    zmax = np.maximum(zb[:-1], zb[1:])
    return np.maximum(0.0, 0.5 * (eta[:-1] + eta[1:]) - zmax)


def cell_to_face(Q, eta, zb, width):
    """Interior face discharges (per unit width) averaged from cell values."""
    H = face_depth(eta, zb)
    q = 0.5 * (Q[:-1] + Q[1:]) / width
    return np.where(H > 0, q, 0.0)


def face_to_cell(q, width):
    """Cell discharge as the mean of its two faces (walls carry zero)."""
    qp = np.concatenate(([0.0], q, [0.0]))
    return 0.5 * width * (qp[:-1] + qp[1:])


def advect_faces(u, H, dx, dt, h_tol=1e-6, substeps=None):
    """Explicit momentum-conservative upwind advection of face velocities.

    u_f <- u_f - dt * (qbar/H_f) * du/dx with qbar the upwind-cell mean of
    face discharges. Sub-cycled to keep the advective Courant number at or
    below 0.5, unless ``substeps`` fixes the count (callers that difference
    the solver need a count that does not jump with the state). Faces
    without water keep u = 0.
    """
    n = u.size
    if n == 0:
        return u
    wet = H > h_tol
    u = np.where(wet, u, 0.0)
    umax = float(np.abs(u).max()) if n else 0.0
    if substeps is None:
        nsub = max(1, int(np.ceil(umax * dt / dx / ADVECTIVE_COURANT)))
    else:
        nsub = int(substeps)
    hdt = dt / nsub
    Hs = np.where(wet, H, 1.0)
    for _ in range(nsub):
        q = H * u
        qe = np.concatenate(([0.0], q, [0.0]))
        ue = np.concatenate(([0.0], u, [0.0]))
        # cell-mean discharge: cell i sits between faces i-1 and i
        qbar = 0.5 * (qe[:-1] + qe[1:])
        pos = u >= 0.0
        # for face f (between cells f, f+1): upwind cell f if u>0 else f+1
        grad_pos = (ue[1:-1] - ue[:-2]) / dx
        grad_neg = (ue[2:] - ue[1:-1]) / dx
        adv = np.where(pos, qbar[:-1] * grad_pos, qbar[1:] * grad_neg) / Hs
        # dividing by a thin-film face depth can overshoot; an upwind update
        # never leaves the range spanned by the face and its upwind neighbour
        up = np.where(pos, ue[:-2], ue[2:])
        lo, hi = np.minimum(u, up), np.maximum(u, up)
        u = np.where(wet, np.clip(u - hdt * adv, lo, hi), 0.0)
    return u


@dataclass
class ReachBlock:
    """Face coefficients of one reach: q_f = W (a_f - c_f (eta_{f+1} - eta_f))."""

    start: int
    n: int
    width: float
    dx: float
    a: np.ndarray
    c: np.ndarray
    H: np.ndarray = None


@dataclass
class PLSystem:
    """Piecewise-linear system for the stacked levels of all reaches.

    ``lower``/``upper``/``diag`` hold the M-matrix T in tridiagonal form;
    reaches are decoupled blocks. ``b`` and ``zb`` are in depth units
    (volume divided by cell plan area).
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    b: np.ndarray
    zb: np.ndarray
    blocks: list
    dt: float
    gate_flows: np.ndarray = None
    requested_gate_flows: np.ndarray = None
    heads: np.ndarray = None
    outflow: float = 0.0
    inflow: float = 0.0

    @property
    def n_cells(self):
        return self.diag.size

    def active_set(self, eta):
        return np.asarray(eta) > self.zb

    def matrix(self, sigma):
        """Schur matrix P(sigma) + T as a sparse matrix."""
        P = np.asarray(sigma, dtype=float)
        return sp.diags(
            [self.lower[1:], P + self.diag, self.upper[:-1]], [-1, 0, 1], format="csr"
        )

    def rhs(self, sigma):
        return self.b + np.asarray(sigma, dtype=float) * self.zb

    def volume(self, eta):
        return np.maximum(0.0, np.asarray(eta) - self.zb)

    def residual(self, eta):
        """V(eta) + T eta - b: zero at the solution."""
        Teta = self.diag * eta
        Teta[1:] += self.lower[1:] * eta[:-1]
        Teta[:-1] += self.upper[:-1] * eta[1:]
        return self.volume(eta) + Teta - self.b

    def face_discharges(self, eta):
        """Per-reach face discharges (m^3/s) implied by the level solution."""
        out = []
        for blk in self.blocks:
            e = eta[blk.start : blk.start + blk.n]
            out.append(blk.width * (blk.a - blk.c * np.diff(e)))
        return out

    def full_matrix(self, sigma):
        """Stacked (eta, q) system before Schur reduction.

        Rows 0..N-1: P eta + dt/dx (q_right - q_left)/W = b0 + P z_b.
        Face rows: q_f + W c_f (eta_{f+1} - eta_f) = W a_f.
        Returns (matrix, rhs).
        """
        N = self.n_cells
        nf = sum(blk.n - 1 for blk in self.blocks)
        rows, cols, vals = [], [], []
        b0 = self.b.copy()
        rhs_q = np.empty(nf)
        P = np.asarray(sigma, dtype=float)
        for i in range(N):
            rows.append(i)
            cols.append(i)
            vals.append(P[i])
        f0 = 0
        for blk in self.blocks:
            k = self.dt / (blk.dx * blk.width)
            for j in range(blk.n - 1):
                f = N + f0 + j
                il, ir = blk.start + j, blk.start + j + 1
                # divergence in the two adjacent cell rows
                rows += [il, ir]
                cols += [f, f]
                vals += [k, -k]
                # face momentum row
                rows += [f, f, f]
                cols += [f, il, ir]
                vals += [1.0, -blk.width * blk.c[j], blk.width * blk.c[j]]
                rhs_q[f0 + j] = blk.width * blk.a[j]
                # b already holds -dt/dx * div(a); undo it for the unreduced form
                b0[il] += self.dt / blk.dx * blk.a[j]
                b0[ir] -= self.dt / blk.dx * blk.a[j]
            f0 += blk.n - 1
        M = sp.csr_matrix((vals, (rows, cols)), shape=(N + nf, N + nf))
        return M, np.concatenate((b0 + P * self.zb, rhs_q))


def assemble_reach(eta, q_face, zb, width, dx, manning, dt, g=9.81, sources=None, h_tol=1e-6,
                   substeps=None):
    """Assemble one reach with n >= 1 cells.

    ``q_face`` holds the n-1 interior face discharges per unit width and
    ``sources`` the net explicit volume rate per cell (m^3/s). Returns
    (lower, diag, upper, b, block) with T in tridiagonal form.
    """
    eta = np.asarray(eta, dtype=float)
    zb = np.asarray(zb, dtype=float)
    n = eta.size
    H = face_depth(eta, zb) if n > 1 else np.zeros(0)
    wet = H > h_tol
    Hs = np.where(wet, H, 1.0)
    u = np.where(wet, np.asarray(q_face, dtype=float) / Hs, 0.0)
    u_adv = advect_faces(u, H, dx, dt, h_tol, substeps)
    gamma = np.where(wet, g * manning**2 * np.abs(u) / Hs ** (4.0 / 3.0), 0.0)
    denom = 1.0 + gamma * dt
    a = np.where(wet, H * u_adv / denom, 0.0)
    c = np.where(wet, g * dt * H / (dx * denom), 0.0)
    Tf = dt * c / dx

    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower[1:] = -Tf
    upper[:-1] = -Tf
    diag[1:] += Tf
    diag[:-1] += Tf

    b = np.maximum(0.0, eta - zb)
    if n > 1:
        flux = dt / dx * a
        b[:-1] -= flux
        b[1:] += flux
    if sources is not None:
        b = b + dt * np.asarray(sources, dtype=float) / (dx * width)
    return lower, diag, upper, b, ReachBlock(0, n, width, dx, a, c, np.where(wet, H, 0.0))


def _levels(reach, state):
    return reach.bathymetry.bed_elevation + state.A / reach.width


def _face_q(reach, state):
    zb = reach.bathymetry.bed_elevation
    eta = _levels(reach, state)
    fq = getattr(state, "face_q", None)
    if fq is not None and fq.size == state.A.size - 1:
        # keep the staggered discharge if the cell view was not edited
        if np.array_equal(face_to_cell(fq, reach.width), state.Q):
            return np.where(face_depth(eta, zb) > 0, fq, 0.0)
    return cell_to_face(state.Q, eta, zb, reach.width)


def assemble_semi_implicit(states, topology, dt, controls=None, inflow=0.0, substeps=None):
    """Build the PLSystem for one step of size ``dt``.

    Inflow, gate transfers and outlet flow enter as explicit sources from
    time-n levels, each withdrawal limited by the water in its cell.
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    if inflow < 0:
        raise ContractError("inflow must be non-negative")
    reaches = topology.reaches
    if controls is None:
        controls = [(0.0, 0.0)] * topology.n_dams
    if len(controls) != topology.n_dams:
        raise ContractError("one (v, z) control per dam required")
    g = topology.g

    req, heads = requested_gate_flows(topology, states, controls)
    src = [np.zeros(s.A.size) for s in states]
    src[0][0] += inflow
    applied = np.empty_like(req)
    for i in range(topology.n_dams):
        dx = reaches[i].bathymetry.dx
        avail = states[i].A[-1] * dx / dt
        q = min(max(req[i], 0.0), avail)
        applied[i] = q
        src[i][-1] -= q
        src[i + 1][0] += q
    last = reaches[-1]
    avail_last = states[-1].A[-1] * last.bathymetry.dx / dt
    q_out = min(outlet_discharge(topology, states[-1]), avail_last)
    src[-1][-1] -= q_out

    parts = []
    start = 0
    for r, s, sr in zip(reaches, states, src):
        b_ = r.bathymetry
        lo, di, up, rhs, blk = assemble_reach(
            _levels(r, s), _face_q(r, s), b_.bed_elevation, r.width, b_.dx,
            r.manning, dt, g, sr, substeps=substeps,
        )
        blk.start = start
        start += blk.n
        parts.append((lo, di, up, rhs, b_.bed_elevation, blk))
    cat = lambda k: np.concatenate([p[k] for p in parts])
    return PLSystem(
        cat(0), cat(1), cat(2), cat(3), cat(4), [p[5] for p in parts], dt,
        gate_flows=applied, requested_gate_flows=req, heads=heads,
        outflow=q_out, inflow=inflow,
    )


def _solve_frozen(system, sigma):
    P = sigma.astype(float)
    diag = system.diag + P
    rhs = system.b + P * system.zb
    lower = system.lower.copy()
    upper = system.upper.copy()
    # a dry cell with no wet face is decoupled: V(eta) = b alone
    iso = diag == 0.0
    if np.any(iso):
        diag = diag.copy()
        diag[iso] = 1.0
        rhs[iso] = system.zb[iso] + np.maximum(system.b[iso], 0.0)
        lower[iso] = 0.0
        upper[iso] = 0.0
    # a dry cell coupled only to dry cells makes the block singular; a tiny
    # pull towards the bed fixes the null space without moving wet cells
    dry = ~sigma & ~iso
    if np.any(dry):
        eps = 1e-13 * max(1.0, float(np.abs(system.diag).max()))
        diag = diag + eps * dry
        rhs = rhs + eps * dry * system.zb
    return np.asarray(backend.thomas_solve(lower, diag, upper, rhs))


def nested_newton_solve(system, x0=None, tol=1e-10):
    """Solve V(eta) + T eta = b by active-set Newton.

    Returns (eta, sigma, iterations). ``iterations`` counts linear solves;
    a starting guess that already satisfies the system costs none. Raises
    NonconvergenceError after 2 * n_cells iterations.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    n = system.n_cells
    if x0 is not None:
        eta = np.asarray(x0, dtype=float).copy()
        r = system.residual(eta)
        if np.abs(r).max() <= tol:
            return eta, system.active_set(eta), 0
        if r.min() < 0.0:
            eta = None
    else:
        eta = None
    if eta is None:
        # constant level above every cell's demand: residual >= 0, all wet
        top = float(np.max(system.zb + np.maximum(system.b, 0.0)))
        eta = np.full(n, top + 1.0)
    sigma = system.active_set(eta)
    cap = 2 * n
    res = np.inf
    for it in range(1, cap + 1):
        eta = _solve_frozen(system, sigma)
        new_sigma = system.active_set(eta)
        res = float(np.abs(system.residual(eta)).max())
        if np.array_equal(new_sigma, sigma) and res <= tol:
            return eta, sigma, it
        if np.array_equal(new_sigma, sigma):
            # same regime but residual above tol: round-off floor reached,
            # set by the rhs and by the dry-block regularisation
            scale = max(1.0, float(np.abs(system.b).max()), float(np.abs(system.diag).max()))
            if res <= tol * scale:
                return eta, sigma, it
        sigma = new_sigma
    raise NonconvergenceError("nested Newton hit the iteration cap", res)


def step_semi_implicit_detailed(states, topology, controls, inflow, dt, tol=1e-10, substeps=None):
    system = assemble_semi_implicit(states, topology, dt, controls, inflow, substeps)
    x0 = np.concatenate([_levels(r, s) for r, s in zip(topology.reaches, states)])
    eta, sigma, _ = nested_newton_solve(system, x0, tol)
    depth = system.volume(eta)
    qf = system.face_discharges(eta)
    out = []
    for r, s, blk, q in zip(topology.reaches, states, system.blocks, qf):
        h = depth[blk.start : blk.start + blk.n]
        A = r.width * h
        # carry the new face velocity onto the new face depth
        u_new = np.where(blk.H > 0, q / (r.width * np.where(blk.H > 0, blk.H, 1.0)), 0.0)
        zb = r.bathymetry.bed_elevation
        qunit = face_depth(zb + h, zb) * u_new
        Q = face_to_cell(qunit, r.width)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Q))):
            raise DefectError("non-finite state after semi-implicit step")
        out.append(ReachState(A, Q, s.t + dt, qunit))
    return StepResult(
        out, system.gate_flows, system.heads, system.outflow, inflow,
        system.requested_gate_flows,
    )


def step_semi_implicit(states, topology, controls, inflow, dt, tol=1e-10, substeps=None):
    """One semi-implicit step; no CFL restriction on ``dt``."""
    return step_semi_implicit_detailed(states, topology, controls, inflow, dt, tol, substeps).states


def run_semi_implicit(topology, states, controls, inflow, t_end, dt, callback=None):
    """Fixed-step march to ``t_end`` (last step shortened to land on it)."""
    t = states[0].t
    while t < t_end - 1e-12:
        h = min(dt, t_end - t)
        res = step_semi_implicit_detailed(states, topology, controls, inflow, h)
        states = res.states
        if callback is not None:
            callback(res, h)
        t += h
    for s in states:
        s.t = t_end
    return states
