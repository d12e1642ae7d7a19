"""State summaries shared by the catalog, the meso layer and the learners."""
from __future__ import annotations

import numpy as np

from ..ocp import _as_paths, operating_cost
from .catalog import CatalogEntry


def initial_summary(topology, states):
    """Per-reach mean depth followed by per-reach mean discharge."""
    h = [float(np.mean(s.A) / r.width) for r, s in zip(topology.reaches, states)]
    q = [float(np.mean(s.Q)) for s in states]
    return h + q


def terminal_dim(topology):
    return 2 * len(topology.reaches) + 2 * topology.n_dams + 2


def terminal_state(topology, snapshot, v_last, z_last, inflow, price):
    """Augmented terminal state: reach summary, last controls, forecast values."""
    return np.array(
        initial_summary(topology, snapshot) + [float(v) for v in v_last]
        + [float(z) for z in z_last] + [float(inflow), float(price)]
    )


def feature_scale(topology, discharge=10.0, inflow=10.0, price=50.0):
    R, D = len(topology.reaches), topology.n_dams
    vmax = [d.max_opening for d in topology.dams]
    return np.array([1.0] * R + [discharge] * R + vmax + [1.0] * D + [inflow, price])


def mean_terminal_state(topology, bundle, schedule, k, paths):
    """Scenario-mean terminal state at interval boundary ``k`` (k >= 1)."""
    t = float(bundle.grid[k])
    xs = []
    for sc, path in zip(bundle.scenarios, paths):
        xs.append(terminal_state(topology, sc.snapshots[k], schedule.v[:, k - 1], schedule.z[:, k - 1],
                                 path.value_at(t, "inflow"), path.value_at(t, "price")))
    return np.mean(xs, axis=0)


def split_index(n_intervals):
    return max(1, n_intervals // 2)


def entry_from_evaluation(instance, schedule, value, bundle, provenance, seed):
    """Catalog entry for a scored schedule; None when it is infeasible.

    The horizon is split at ``split_index``: the terminal state is taken at
    the split and J_tail is the revenue and operating cost after it.
    """
    if not value.finite or not np.all(bundle.chi == 1):
        return None
    paths = _as_paths(instance.paths)
    k = split_index(schedule.n_intervals)
    x_term = mean_terminal_state(instance.topology, bundle, schedule, k, paths)
    tail_rev = np.mean([float(sc.revenue[k:].sum()) for sc in bundle.scenarios]) * instance.params.price_scale
    tail_sched = schedule.copy()
    tail_sched.grid = schedule.grid[k - 1 :]
    tail_sched.v = schedule.v[:, k - 1 :]
    tail_sched.z = schedule.z[:, k - 1 :]
    J_tail = -tail_rev + operating_cost(tail_sched, instance.params)
    return CatalogEntry(
        initial_summary=initial_summary(instance.topology, instance.initial_states),
        grid=[float(t) for t in schedule.grid - schedule.grid[0]],
        v=schedule.v.tolist(), z=schedule.z.tolist(),
        J=float(value.J), J_tail=float(J_tail), x_terminal=[float(a) for a in x_term],
        chi=1, seed=int(seed), provenance=provenance,
    )
