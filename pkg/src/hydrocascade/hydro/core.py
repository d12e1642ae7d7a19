"""First-order finite-volume Saint-Venant solver for a dammed cascade.

Channels are rectangular and prismatic, so depth h = A / width. The momentum
equation is taken literally from the conservative form

    Q_t + (Q^2/A + g A^2 / (2 W))_x = g A (S_o - S_f),
    S_f = n^2 Q|Q| W^{4/3} / A^{10/3},

which reduces to the textbook unit-width form for W = 1. The friction sink
g A S_f therefore scales as Q|Q| W^{4/3} / A^{7/3}.

Each reach has wall ends. Inflow, gate transfer and the downstream outlet are
point sources/sinks on the end cells, so total volume changes by exactly
dt * (inflow - outflow).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backend

G = 9.81
DRY_TOL = 1e-8
RHO = 1000.0
DEFAULT_CFL = 0.45


class DryCellError(ValueError):
    """Physical flux requested for a cell below the dry tolerance."""


class DefectError(RuntimeError):
    """A solver invariant was broken (negative depth, non-finite state)."""


class ContractError(ValueError):
    """Input outside an operation's declared domain."""


@dataclass(frozen=True)
class Bathymetry:
    cell_centers: np.ndarray
    bed_elevation: np.ndarray
    dx: float

    def __post_init__(self):
        zb = np.asarray(self.bed_elevation, dtype=float)
        xc = np.asarray(self.cell_centers, dtype=float)
        object.__setattr__(self, "bed_elevation", zb)
        object.__setattr__(self, "cell_centers", xc)
        if not self.dx > 0:
            raise ContractError("dx must be positive")
        if zb.ndim != 1 or zb.size < 3:
            raise ContractError("need at least 3 cells")
        if xc.shape != zb.shape:
            raise ContractError("cell_centers and bed_elevation differ in length")
        if not np.all(np.isfinite(zb)):
            raise ContractError("bed elevation must be finite")

    @classmethod
    def uniform(cls, length, n_cells, bed=0.0, x0=0.0):
        """Equal cells over ``[x0, x0 + length]``; ``bed`` is a constant,
        an array, or a callable of the cell centres."""
        dx = length / n_cells
        xc = x0 + dx * (np.arange(n_cells) + 0.5)
        if callable(bed):
            zb = np.asarray(bed(xc), dtype=float)
        else:
            zb = np.broadcast_to(np.asarray(bed, dtype=float), xc.shape).copy()
        return cls(xc, zb, dx)

    @property
    def n_cells(self):
        return self.bed_elevation.size

    @property
    def length(self):
        return self.dx * self.n_cells


@dataclass
class ReachState:
    A: np.ndarray
    Q: np.ndarray
    t: float = 0.0
    # staggered face discharges per unit width, kept by the semi-implicit
    # stepper so that repeated steps do not re-average Q
    face_q: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)

    def copy(self):
        fq = None if self.face_q is None else self.face_q.copy()
        return ReachState(self.A.copy(), self.Q.copy(), self.t, fq)

    def validate(self, n_cells=None):
        if self.A.shape != self.Q.shape:
            raise ContractError("A and Q differ in length")
        if n_cells is not None and self.A.size != n_cells:
            raise ContractError("state length does not match bathymetry")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.Q))):
            raise DefectError("non-finite state")
        if np.any(self.A < 0):
            raise DefectError("negative wetted area")


@dataclass(frozen=True)
class DamParams:
    discharge_coefficient: float = 0.6
    gate_width: float = 5.0
    max_opening: float = 1.0
    turbine_efficiency: float = 0.9
    head_reference: float = 0.0

    def __post_init__(self):
        if not 0 < self.discharge_coefficient <= 2:
            raise ContractError("discharge coefficient must lie in (0, 2]")
        if self.gate_width <= 0 or self.max_opening <= 0:
            raise ContractError("gate width and max opening must be positive")
        if not 0 < self.turbine_efficiency <= 1:
            raise ContractError("turbine efficiency must lie in (0, 1]")


@dataclass(frozen=True)
class Reach:
    bathymetry: Bathymetry
    manning: float = 0.03
    width: float = 1.0

    def __post_init__(self):
        if self.manning < 0:
            raise ContractError("Manning coefficient must be non-negative")
        if self.width <= 0:
            raise ContractError("channel width must be positive")


@dataclass(frozen=True)
class CascadeTopology:
    """Reaches ordered upstream to downstream; ``dams[i]`` joins reach i and i+1.

    The upstream inflow enters the first cell of reach 0. The downstream
    stage port is a free weir on the last cell of the last reach:
    Q_out = outlet_coefficient * W * sqrt(2g) * max(eta - outlet_stage, 0)^1.5.
    A zero coefficient closes it.
    """

    reaches: tuple
    dams: tuple = ()
    outlet_coefficient: float = 0.0
    outlet_stage: float = 0.0
    g: float = G
    dry_tol: float = DRY_TOL
    cfl: float = DEFAULT_CFL
    dt_max: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "reaches", tuple(self.reaches))
        object.__setattr__(self, "dams", tuple(self.dams))
        if len(self.reaches) < 1:
            raise ContractError("need at least one reach")
        if len(self.dams) != len(self.reaches) - 1:
            raise ContractError("dams count must equal reaches count - 1")
        if not 0 < self.cfl <= 1:
            raise ContractError("cfl must lie in (0, 1]")

    @property
    def n_dams(self):
        return len(self.dams)

    def coarsened(self, factor=2):
        """Same cascade on a grid ``factor`` times coarser (bed averaged)."""
        reaches = []
        for r in self.reaches:
            b = r.bathymetry
            n = b.n_cells // factor
            if n < 3:
                raise ContractError("coarsening leaves fewer than 3 cells")
            zb = b.bed_elevation[: n * factor].reshape(n, factor).mean(axis=1)
            xc = b.cell_centers[: n * factor].reshape(n, factor).mean(axis=1)
            reaches.append(Reach(Bathymetry(xc, zb, b.dx * factor), r.manning, r.width))
        return CascadeTopology(
            tuple(reaches), self.dams, self.outlet_coefficient, self.outlet_stage,
            self.g, self.dry_tol, self.cfl, self.dt_max,
        )


def lake_state(reach, eta, Q=0.0):
    """Still water at free-surface level ``eta`` (dry where the bed is higher)."""
    zb = reach.bathymetry.bed_elevation
    h = np.maximum(np.asarray(eta, dtype=float) - zb, 0.0)
    A = reach.width * h
    return ReachState(A, np.where(A > 0, Q, 0.0) * np.ones_like(A))


def restrict_state(state, factor=2):
    """Average a fine-grid state onto the grid built by ``coarsened``."""
    n = state.A.size // factor
    A = state.A[: n * factor].reshape(n, factor).mean(axis=1)
    Q = state.Q[: n * factor].reshape(n, factor).mean(axis=1)
    return ReachState(A, Q, state.t)


def prolong_state(state, factor=2):
    return ReachState(np.repeat(state.A, factor), np.repeat(state.Q, factor), state.t)


# ----------------------------------------------------------------------------
# pointwise operators


def physical_flux(A, Q, g=G, width=1.0, dry_tol=DRY_TOL):
    """Conservative flux (Q, Q^2/A + g A^2 / (2 W)).

    Raises DryCellError when A <= dry_tol; callers substitute a zero flux.
    """
    if A <= dry_tol:
        raise DryCellError(f"cell is dry (A={A!r})")
    return Q, Q * Q / A + 0.5 * g * A * A / width


def hll_interface_flux(left, right, g=G, width=1.0, dry_tol=DRY_TOL):
    """HLL flux between two (A, Q) states; dry sides are treated as empty."""
    AL, QL = left
    AR, QR = right
    hL, hR = AL / width, AR / width
    uL = QL / AL if AL > dry_tol else 0.0
    uR = QR / AR if AR > dry_tol else 0.0
    F0, F1 = backend._kernels_py.hll_flux_arrays(
        np.array([hL]), np.array([uL]), np.array([hR]), np.array([uR]),
        width, g, dry_tol / width,
    )
    return float(F0[0]), float(F1[0])


def hydrostatic_reconstruct(cell_L, cell_R, zb_L, zb_R, width=1.0, dry_tol=DRY_TOL):
    """Interface states with depths h* = max(0, h + z_b - max(z_b_L, z_b_R)).

    Velocities are kept, so Q* = A* u.
    """
    zmax = max(zb_L, zb_R)
    out = []
    for (A, Q), zb in ((cell_L, zb_L), (cell_R, zb_R)):
        u = Q / A if A > dry_tol else 0.0
        hs = max(0.0, A / width + zb - zmax)
        out.append((width * hs, width * hs * u))
    return tuple(out)


def friction_semi_implicit(A, Q, dt, manning, width=1.0, g=G, dry_tol=DRY_TOL):
    """Q_new = Q / (1 + dt g n^2 |Q| W^{4/3} / A^{7/3}); dry cells get Q = 0.

    This is the exact solve of Q_new = Q - dt g n^2 Q_new |Q| W^{4/3} / A^{7/3},
    so |Q_new| <= |Q| and the sign is kept.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    wet = A > dry_tol
    Asafe = np.where(wet, A, 1.0)
    k = dt * g * manning**2 * np.abs(Q) * width ** (4.0 / 3.0) / Asafe ** (7.0 / 3.0)
    return np.where(wet, Q / (1.0 + k), 0.0)


def gate_discharge(h_up, h_down, v, z, params, g=G):
    """Orifice law z * Cd * w * v * sqrt(2 g max(h_up - h_down, 0)).

    ``h_up``/``h_down`` are water levels on either side of the gate.
    ``z`` may be fractional for relaxed schedules.
    """
    if not 0.0 <= v <= params.max_opening:
        raise ContractError(f"gate opening {v!r} outside [0, {params.max_opening}]")
    head = max(h_up - h_down, 0.0)
    return z * params.discharge_coefficient * params.gate_width * v * np.sqrt(2.0 * g * head)


def power_output(Q_gate, head, params, g=G):
    """Turbine power in MW: rho g eta_t Q H / 1e6."""
    return RHO * g * params.turbine_efficiency * Q_gate * max(head, 0.0) / 1e6


def cfl_dt(state, bathymetry, cfl=DEFAULT_CFL, width=1.0, g=G, dry_tol=DRY_TOL, dt_max=60.0):
    """Largest stable explicit step; ``dt_max`` when every cell is dry."""
    if not 0 < cfl <= 1:
        raise ContractError("cfl must lie in (0, 1]")
    A = state.A
    wet = A > dry_tol
    if not np.any(wet):
        return dt_max
    Aw = A[wet]
    speed = np.abs(state.Q[wet] / Aw) + np.sqrt(g * Aw / width)
    return min(cfl * bathymetry.dx / float(speed.max()), dt_max)


def cascade_cfl_dt(topology, states):
    return min(
        cfl_dt(s, r.bathymetry, topology.cfl, r.width, topology.g, topology.dry_tol, topology.dt_max)
        for r, s in zip(topology.reaches, states)
    )


# ----------------------------------------------------------------------------
# cascade stepping


@dataclass
class StepResult:
    states: list
    gate_flows: np.ndarray
    heads: np.ndarray
    outflow: float
    inflow: float
    requested_gate_flows: np.ndarray = field(default=None)


def free_surface(reach, state):
    return reach.bathymetry.bed_elevation + state.A / reach.width


def gate_heads(topology, states):
    """Water-level difference across each dam (upstream last cell minus
    downstream first cell)."""
    heads = np.empty(topology.n_dams)
    for i in range(topology.n_dams):
        up, dn = topology.reaches[i], topology.reaches[i + 1]
        eta_up = up.bathymetry.bed_elevation[-1] + states[i].A[-1] / up.width
        eta_dn = dn.bathymetry.bed_elevation[0] + states[i + 1].A[0] / dn.width
        heads[i] = eta_up - eta_dn
    return heads


def requested_gate_flows(topology, states, controls):
    heads = gate_heads(topology, states)
    flows = np.empty(topology.n_dams)
    for i, dam in enumerate(topology.dams):
        v, z = controls[i]
        flows[i] = gate_discharge(heads[i], 0.0, v, z, dam, topology.g)
    return flows, heads


def outlet_discharge(topology, state):
    if topology.outlet_coefficient <= 0:
        return 0.0
    last = topology.reaches[-1]
    eta = last.bathymetry.bed_elevation[-1] + state.A[-1] / last.width
    over = max(eta - topology.outlet_stage, 0.0)
    return topology.outlet_coefficient * last.width * np.sqrt(2.0 * topology.g) * over**1.5


def apply_boundary_sources(topology, pre_states, new_A, new_Q, controls, inflow, dt):
    """Point sources at reach ends, computed from pre-step levels and clipped
    so no end cell is overdrawn. Mutates ``new_A``/``new_Q`` in place.

    Returns (applied gate flows, heads, applied outflow, requested gate flows).
    """
    if inflow < 0:
        raise ContractError("inflow must be non-negative")
    reaches = topology.reaches
    req, heads = requested_gate_flows(topology, pre_states, controls)
    applied = np.empty_like(req)

    dx0 = reaches[0].bathymetry.dx
    new_A[0][0] += dt * inflow / dx0

    for i in range(topology.n_dams):
        dx_up = reaches[i].bathymetry.dx
        dx_dn = reaches[i + 1].bathymetry.dx
        q = _withdraw(new_A[i], new_Q[i], -1, req[i], dx_up, dt)
        applied[i] = q
        new_A[i + 1][0] += dt * q / dx_dn

    q_out_req = outlet_discharge(topology, pre_states[-1])
    q_out = _withdraw(new_A[-1], new_Q[-1], -1, q_out_req, reaches[-1].bathymetry.dx, dt)
    return applied, heads, q_out, req


def _withdraw(A, Q, idx, q_req, dx, dt):
    """Remove up to ``q_req`` m^3/s from cell ``idx``; momentum leaves with
    the water so the cell velocity is unchanged."""
    if q_req <= 0.0:
        return 0.0
    avail = A[idx] * dx / dt
    q = min(q_req, avail)
    A_old = A[idx]
    A[idx] = A_old - dt * q / dx
    if A[idx] < 0.0:
        A[idx] = 0.0
    Q[idx] = Q[idx] * (A[idx] / A_old) if A_old > 0 else 0.0
    return q


def _check_positivity(A, dry_tol):
    amin = A.min()
    if amin < 0.0:
        # round-off in the flux difference of a cell drained to exactly zero
        if amin > -1e-12 * max(1.0, float(A.max())):
            np.maximum(A, 0.0, out=A)
        else:
            raise DefectError(f"negative wetted area {amin!r} after update")


def advance_cascade_detailed(topology, states, controls, inflow, dt):
    """One explicit step of the whole cascade; see ``advance_cascade``."""
    reaches = topology.reaches
    if len(states) != len(reaches):
        raise ContractError("one state per reach required")
    if len(controls) != topology.n_dams:
        raise ContractError("one (v, z) control per dam required")
    g, tol = topology.g, topology.dry_tol
    new_A, new_Q = [], []
    for r, s in zip(reaches, states):
        b = r.bathymetry
        A, Q = backend.reach_step(s.A, s.Q, b.bed_elevation, r.width, b.dx, dt, g, tol, r.manning)
        new_A.append(np.asarray(A))
        new_Q.append(np.asarray(Q))
    applied, heads, q_out, req = apply_boundary_sources(
        topology, states, new_A, new_Q, controls, inflow, dt
    )
    out = []
    for A, Q, s in zip(new_A, new_Q, states):
        _check_positivity(A, tol)
        Q[A <= tol] = 0.0
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Q))):
            raise DefectError("non-finite state after update")
        out.append(ReachState(A, Q, s.t + dt))
    return StepResult(out, applied, heads, q_out, inflow, req)


def advance_cascade(topology, states, controls, inflow, dt):
    """Advance every reach by one explicit finite-volume step.

    ``controls`` holds one (v, z) pair per dam; ``inflow`` enters reach 0.
    Gate discharge leaves the last cell of the upstream reach and enters the
    first cell of the downstream one. Raises DefectError on a negative depth.
    """
    return advance_cascade_detailed(topology, states, controls, inflow, dt).states


def total_volume(topology, states):
    return sum(float(np.sum(s.A)) * r.bathymetry.dx for r, s in zip(topology.reaches, states))


def run_explicit(topology, states, controls, inflow, t_end, callback=None):
    """March ``advance_cascade`` with CFL-limited steps up to ``t_end``.

    Returns the final states. ``callback(step_result, dt)`` sees every step.
    """
    t = states[0].t
    while t < t_end - 1e-12:
        dt = min(cascade_cfl_dt(topology, states), t_end - t)
        res = advance_cascade_detailed(topology, states, controls, inflow, dt)
        states = res.states
        if callback is not None:
            callback(res, dt)
        t += dt
    for s in states:
        s.t = t_end
    return states
