"""Rounding, local search and switch-count enumeration for switch schedules."""
from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..hydro.core import ContractError
from ..ocp import ControlSchedule
from ..sqcqp import NLPProblem, sqcqp_solve

log = logging.getLogger(__name__)


def sum_up_rounding(zbar, grid):
    """Binary schedule whose running integral tracks the relaxed one.

    Interval k opens when sum_{j<=k} zbar_j dt_j - sum_{j<k} z_j dt_j >= dt_k / 2,
    which keeps every prefix integral within dt/2 of the relaxed one.
    """
    zbar = np.atleast_2d(np.asarray(zbar, dtype=float))
    dt = np.diff(np.asarray(grid, dtype=float))
    if zbar.shape[1] != dt.size:
        raise ContractError("relaxed schedule needs one column per interval")
    if np.any(zbar < 0) or np.any(zbar > 1):
        raise ContractError("relaxed z must lie in [0, 1]")
    z = np.zeros_like(zbar)
    for d in range(zbar.shape[0]):
        acc = 0.0
        for k in range(dt.size):
            acc += zbar[d, k] * dt[k]
            if acc >= 0.5 * dt[k]:
                z[d, k] = 1.0
                acc -= dt[k]
    return z


def prefix_deviation(zbar, z, grid):
    """max_tau |sum_{t<=tau} (zbar - z) dt| per dam."""
    dt = np.diff(np.asarray(grid, dtype=float))
    diff = (np.atleast_2d(zbar) - np.atleast_2d(z)) * dt
    return np.abs(np.cumsum(diff, axis=1)).max(axis=1)


# ----------------------------------------------------------------------------
# steepest descent with a tabu list


@dataclass
class GreedyResult:
    schedule: ControlSchedule
    J: float
    trace: list
    evaluations: int
    moves: list = field(default_factory=list)


def _neighbours(schedule, v_step, v_hi):
    D, T = schedule.z.shape
    for d in range(D):
        for k in range(T):
            yield ("z", d, k, 0)
    if v_step > 0:
        for d in range(D):
            for k in range(T):
                for sign in (1, -1):
                    nv = schedule.v[d, k] + sign * v_step
                    if -1e-12 <= nv <= v_hi[d] + 1e-12:
                        yield ("v", d, k, sign)


def _apply(schedule, move, v_step, v_hi):
    s = schedule.copy()
    kind, d, k, sign = move
    if kind == "z":
        s.z[d, k] = 1.0 - s.z[d, k]
    else:
        s.v[d, k] = float(np.clip(s.v[d, k] + sign * v_step, 0.0, v_hi[d]))
    return s


def _inverse(move):
    kind, d, k, sign = move
    return (kind, d, k, -sign)


def greedy_improve(schedule, evaluate, budget=200, v_step=0.0, v_max=None, tabu_size=10):
    """Steepest descent over single z flips and single v steps.

    Every non-tabu neighbour is scored and the best one is taken if it
    improves the current value; the reverse of each applied move stays
    tabu for the next ``tabu_size`` moves. Stops at a local optimum or when
    ``budget`` evaluations are spent, and never returns a worse schedule.
    """
    cur = schedule.copy()
    D = cur.n_dams
    v_hi = np.full(D, np.inf) if v_max is None else np.broadcast_to(np.asarray(v_max, float), (D,))
    J_cur = float(evaluate(cur))
    evals = 1
    trace = [J_cur]
    tabu = deque(maxlen=tabu_size)
    applied = []
    while evals < budget:
        best = None
        for move in _neighbours(cur, v_step, v_hi):
            if move in tabu:
                continue
            if evals >= budget:
                break
            cand = _apply(cur, move, v_step, v_hi)
            J = float(evaluate(cand))
            evals += 1
            if math.isfinite(J) and (best is None or J < best[0]):
                best = (J, move, cand)
        if best is None or not best[0] < J_cur:
            break
        J_cur, move, cur = best
        tabu.append(_inverse(move))
        applied.append(move)
        trace.append(J_cur)
    return GreedyResult(cur, J_cur, trace, evals, applied)


# ----------------------------------------------------------------------------
# switch counts outside, switch times inside


def open_fraction(initial, times, grid):
    """Fraction of each interval a gate spends open, given its start state
    and sorted switch times (coinciding switches cancel)."""
    grid = np.asarray(grid, dtype=float)
    times = np.sort(np.asarray(times, dtype=float))
    out = np.empty(grid.size - 1)
    for k in range(grid.size - 1):
        a, b = grid[k], grid[k + 1]
        inside = times[(times > a) & (times < b)]
        state = (int(initial) + int(np.searchsorted(times, a, side="right"))) % 2
        cuts = np.concatenate(([a], inside, [b]))
        on = 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            on += (hi - lo) * state
            state ^= 1
        out[k] = on / (b - a)
    return out


@dataclass
class HierarchicalResult:
    counts: np.ndarray
    initial: np.ndarray
    times: list
    z: np.ndarray
    J: float
    table: list = field(default_factory=list)


def _z_of(counts, initial, flat_times, grid):
    rows, i = [], 0
    for d, n in enumerate(counts):
        rows.append(open_fraction(initial[d], flat_times[i : i + n], grid))
        i += n
    return np.array(rows)


def _grid_starts(counts, grid, cap):
    per_dam = [list(itertools.combinations(grid[1:-1], int(n))) for n in counts]
    if any(len(p) == 0 for p in per_dam):
        return []
    n_total = int(np.prod([len(p) for p in per_dam]))
    if n_total > cap:
        return []
    return [np.concatenate([np.asarray(c, float) for c in combo]) for combo in itertools.product(*per_dam)]


def _spread_times(counts, grid):
    t0, t1 = grid[0], grid[-1]
    return np.concatenate([t0 + (t1 - t0) * np.arange(1, n + 1) / (n + 1) for n in counts])


def hierarchical_solve(problem, zmax, max_iter=30, placement_cap=4096):
    """Loop over switch-count vectors and start states; place switch times
    continuously for each.

    For every (counts, start state) all switch placements on grid points
    are scored first, then the best is refined with sqcqp over the times
    (ordered, inside the horizon). The returned z is the open fraction per
    interval, so it can be fractional when a switch falls mid-interval.
    A count vector whose inner solve fails is skipped and logged.
    """
    if zmax < 0:
        raise ContractError("zmax must be non-negative")
    D, T = problem.shape
    grid = np.asarray(problem.grid, dtype=float)
    best = None
    table = []
    for counts in itertools.product(range(zmax + 1), repeat=D):
        for initial in itertools.product((0, 1), repeat=D):
            try:
                res = _inner(problem, np.array(counts), np.array(initial), grid, max_iter, placement_cap)
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("switch counts %s, start %s skipped: %s", counts, initial, exc)
                table.append((counts, initial, math.inf))
                continue
            table.append((counts, initial, res.J))
            if res.J < (best.J if best else math.inf):
                best = res
    if best is None:
        raise RuntimeError("no switch-count vector produced a finite objective")
    best.table = table
    return best


def _inner(problem, counts, initial, grid, max_iter, placement_cap):
    n = int(counts.sum())
    f = lambda tau: float(problem.objective(_z_of(counts, initial, tau, grid)))
    if n == 0:
        tau = np.zeros(0)
        J = f(tau)
        return HierarchicalResult(counts, initial, _split(counts, tau), _z_of(counts, initial, tau, grid), J)
    starts = _grid_starts(counts, grid, placement_cap) or [_spread_times(counts, grid)]
    scored = [(f(s), i) for i, s in enumerate(starts)]
    J0, i0 = min(scored)
    tau0 = starts[i0]
    if not math.isfinite(J0):
        raise ArithmeticError("no finite placement")
    # ordering constraints within each dam
    pairs = []
    i = 0
    for c in counts:
        pairs += [(i + j, i + j + 1) for j in range(c - 1)]
        i += c
    A = np.zeros((len(pairs), n))
    for r, (a, b) in enumerate(pairs):
        A[r, a], A[r, b] = -1.0, 1.0
    span = grid[-1] - grid[0]
    prob = NLPProblem(
        n, lambda tau: (f(tau), np.zeros(0), A @ tau),
        ineq_jac=lambda tau: A, lower=np.full(n, grid[0]), upper=np.full(n, grid[-1]),
        scale=np.full(n, span),
    )
    res = sqcqp_solve(prob, tau0, tol=1e-8 * span, max_iter=max_iter)
    tau = res.x.copy()
    # sort within dams and keep whichever of start and refinement is better
    i = 0
    for c in counts:
        tau[i : i + c] = np.sort(tau[i : i + c])
        i += c
    J = f(tau)
    if not J <= J0:
        tau, J = tau0, J0
    return HierarchicalResult(counts, initial, _split(counts, tau), _z_of(counts, initial, tau, grid), J)


def _split(counts, tau):
    out, i = [], 0
    for c in counts:
        out.append(np.asarray(tau[i : i + c], float))
        i += c
    return out
