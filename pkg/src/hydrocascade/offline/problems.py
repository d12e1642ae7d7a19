"""Mixed-integer scheduling problems in the form the offline searches use.

A problem exposes binary switch variables ``z`` of shape (n_dams, N_T)
flattened row by row, an ``objective(z)`` that accepts relaxed values in
[0, 1], a canonical ``evaluate_integer(z)``, and ``relax(lower, upper)``
solving the continuous relaxation with some entries pinned by equal
bounds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..hydro.core import ContractError
from ..ocp import ControlSchedule
from ..sqcqp import NLPProblem, sqcqp_solve

log = logging.getLogger(__name__)


@dataclass
class RelaxResult:
    J: float
    z: np.ndarray
    ok: bool
    status: str = ""


class SwitchProblem:
    """Shared plumbing; subclasses implement ``objective`` and may supply
    exact derivatives through ``gradient``/``hessian``."""

    shape: tuple
    grid: np.ndarray
    relax_tol: float = 1e-9
    relax_max_iter: int = 60

    @property
    def n_binary(self):
        return int(np.prod(self.shape))

    def objective(self, z):
        raise NotImplementedError

    def gradient(self, z):
        return None

    def hessian(self, z):
        return None

    def evaluate_integer(self, z):
        z = np.asarray(z, dtype=float).reshape(self.shape)
        if np.any((z != 0) & (z != 1)):
            raise ContractError("evaluate_integer needs a binary schedule")
        return float(self.objective(z))

    def relax(self, lower, upper, start=None):
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        free = lower < upper
        base = lower.copy()
        if not np.any(free):
            J = self.objective(base.reshape(self.shape))
            return RelaxResult(float(J), base, math.isfinite(J), "fixed")

        def full(x):
            z = base.copy()
            z[free] = x
            return z.reshape(self.shape)

        grad = hess = None
        if self.gradient(base.reshape(self.shape)) is not None:
            grad = lambda x: np.asarray(self.gradient(full(x))).ravel()[free]
            hess = lambda x: np.asarray(self.hessian(full(x)))[np.ix_(free, free)]
        prob = NLPProblem(
            int(free.sum()),
            lambda x: (self.objective(full(x)), np.zeros(0), np.zeros(0)),
            grad=grad, hess=hess, lower=lower[free], upper=upper[free],
        )
        x0 = np.full(int(free.sum()), 0.5) if start is None else np.asarray(start, float).ravel()[free]
        x0 = np.clip(x0, lower[free], upper[free])
        if not math.isfinite(prob.eval(x0)[0]):
            return RelaxResult(math.inf, full(x0).ravel(), False, "infeasible start")
        res = sqcqp_solve(prob, x0, tol=self.relax_tol, max_iter=self.relax_max_iter)
        z = full(res.x).ravel()
        return RelaxResult(float(res.F), z, math.isfinite(res.F), res.status)


# ----------------------------------------------------------------------------
# toy cascade: storages in series, switches turn a fixed turbine flow on


@dataclass
class ToyCascade(SwitchProblem):
    """Linear-storage cascade whose objective is a convex quadratic in z.

    Storage of reservoir d after interval k is

        S[d, k+1] = S0[d] + dt * sum_{j<=k} (inflow_d + q[d-1] z[d-1, j] - q[d] z[d, j])

    and J = -sum p_k dt e_d q_d z[d, k] + w |S - target|^2 + c_z sum (z[d,k] - z[d,k-1])^2.
    The squared switch term equals the switch count on binaries and keeps
    the relaxation convex, so the relaxed optimum is a true lower bound.
    """

    prices: np.ndarray
    turbine_flow: np.ndarray
    energy_factor: np.ndarray
    inflow: float
    storage0: np.ndarray
    target: np.ndarray
    storage_weight: float = 1.0
    switch_weight: float = 0.0
    dt: float = 1.0
    _Hq: np.ndarray = field(init=False, repr=False)
    _lin: np.ndarray = field(init=False, repr=False)
    _const: float = field(init=False, repr=False)

    def __post_init__(self):
        self.prices = np.asarray(self.prices, float)
        self.turbine_flow = np.asarray(self.turbine_flow, float)
        self.energy_factor = np.asarray(self.energy_factor, float)
        self.storage0 = np.asarray(self.storage0, float)
        self.target = np.asarray(self.target, float)
        D, T = self.turbine_flow.size, self.prices.size
        self.shape = (D, T)
        self.grid = self.dt * np.arange(T + 1, dtype=float)
        idx = lambda d, k: d * T + k
        # storage map S = s0 + M z on the (d, k+1) entries
        M = np.zeros((D * T, D * T))
        s0 = np.zeros(D * T)
        for d in range(D):
            for k in range(T):
                row = idx(d, k)
                s0[row] = self.storage0[d] + (self.dt * (k + 1) * self.inflow if d == 0 else 0.0)
                for j in range(k + 1):
                    M[row, idx(d, j)] -= self.dt * self.turbine_flow[d]
                    if d > 0:
                        M[row, idx(d - 1, j)] += self.dt * self.turbine_flow[d - 1]
        Dm = np.zeros((D * max(T - 1, 0), D * T))
        for d in range(D):
            for k in range(1, T):
                r = d * (T - 1) + k - 1
                Dm[r, idx(d, k)] = 1.0
                Dm[r, idx(d, k - 1)] = -1.0
        rev = np.array([-self.prices[k] * self.dt * self.energy_factor[d] * self.turbine_flow[d]
                        for d in range(D) for k in range(T)])
        off = s0 - np.repeat(self.target, T)
        w, cz = self.storage_weight, self.switch_weight
        self._Hq = 2.0 * (w * M.T @ M + cz * Dm.T @ Dm)
        self._lin = rev + 2.0 * w * M.T @ off
        self._const = w * float(off @ off)

    def objective(self, z):
        x = np.asarray(z, float).ravel()
        return float(self._const + self._lin @ x + 0.5 * x @ self._Hq @ x)

    def gradient(self, z):
        x = np.asarray(z, float).ravel()
        return self._lin + self._Hq @ x

    def hessian(self, z):
        return self._Hq

    @classmethod
    def random(cls, rng, n_dams=2, n_intervals=4, switch_weight=None):
        D, T = n_dams, n_intervals
        q = rng.uniform(0.5, 1.5, D)
        return cls(
            prices=rng.uniform(0.0, 2.0, T),
            turbine_flow=q,
            energy_factor=rng.uniform(0.5, 1.5, D),
            inflow=float(rng.uniform(0.3, 1.0)),
            storage0=rng.uniform(1.0, 3.0, D),
            target=rng.uniform(1.0, 3.0, D),
            storage_weight=float(rng.uniform(0.05, 0.5)),
            switch_weight=float(rng.uniform(0.0, 0.3)) if switch_weight is None else switch_weight,
        )


def enumerate_binary(problem):
    """Exhaustive minimum over all 2^n binary schedules: (z, J)."""
    n = problem.n_binary
    if n > 24:
        raise ContractError("enumeration limited to 24 binaries")
    best_J, best_z = math.inf, None
    for code in range(1 << n):
        z = np.array([(code >> (n - 1 - i)) & 1 for i in range(n)], dtype=float)
        J = problem.evaluate_integer(z)
        if J < best_J:
            best_J, best_z = J, z
    return best_z.reshape(problem.shape), best_J


# ----------------------------------------------------------------------------
# PDE-backed problem: fixed gate openings, switch decisions free


class OCPSwitchProblem(SwitchProblem):
    """Switch decisions of an ``OCPInstance`` with gate openings held fixed.

    Relaxed z enters the gate law directly, so a fractional z is a time
    fraction of an open gate. The relaxation is nonconvex, which makes its
    value a heuristic bound rather than a certificate.
    """

    def __init__(self, instance, v, relax_tol=1e-6, relax_max_iter=15):
        self.instance = instance
        self.grid = np.asarray(instance.grid, float)
        self.v = np.atleast_2d(np.asarray(v, float))
        self.shape = self.v.shape
        if self.shape[1] != self.grid.size - 1:
            raise ContractError("v must have one column per interval")
        self.relax_tol = relax_tol
        self.relax_max_iter = relax_max_iter

    def schedule(self, z):
        z = np.asarray(z, float).reshape(self.shape)
        relaxed = bool(np.any((z != 0) & (z != 1)))
        return ControlSchedule(self.grid.copy(), self.v.copy(), z.copy(), relaxed)

    def objective(self, z):
        return float(self.instance.J(self.schedule(z)))
